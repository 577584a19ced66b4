''' Epoch loop for LAP-extended models: task loss plus the knowledge-injection
losses of every LAP, validation by balanced accuracy and best-epoch
selection. '''

import copy
import logging

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import balanced_accuracy_score
from torch.utils.data import DataLoader

from .exceptions import LapConfigError
from .losses import (ConceptAnnotation, DiscLossConfig, bbox_supervision_loss, combine_losses,
                     concept_discrimination_loss, concordance_loss, discriminative_selector_loss)

logger = logging.getLogger(__name__)


def make_optimizer(name, params, lr, weight_decay=0.0):
    if name == 'adam':
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    if name == 'sgd':
        return torch.optim.SGD(params, lr=lr, momentum=0.9, weight_decay=weight_decay)
    raise LapConfigError('Unknown optimizer %r' % name, ['optimizer'])


def freeze_norm_stats(model):
    ''' Batch-norm layers whose parameters are all frozen stop updating their
    running statistics. '''
    for m in model.modules():
        if isinstance(m, nn.modules.batchnorm._BatchNorm):
            params = list(m.parameters())
            if params and not any(p.requires_grad for p in params):
                m.eval()


def concepts_map(section):
    ''' {label: [concept indices]} from the `concepts` config section. '''
    return dict((int(k), list(v)) for k, v in section.items())


def predict(model, images, batch_size=256, device='cpu'):
    ''' Logits of a batch of images (numpy or tensor), evaluated in eval mode. '''
    was_training = model.training
    model.eval()
    images = torch.as_tensor(images)
    out = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model(images[i:i + batch_size].to(device)).cpu())
    model.train(was_training)
    return torch.cat(out) if out else torch.zeros(0)


def balanced_accuracy(model, split, batch_size=256, device='cpu'):
    preds = predict(model, split.images, batch_size, device).argmax(1).numpy()
    return float(balanced_accuracy_score(split.labels, preds))


class Trainer(object):

    ''' Trains a LapModel on a SynthSplit-like training split.
    Args:
        model: LapModel (vanilla models simply have no LAP losses).
        loss_config: losses.LossConfig.
        concepts: {label: [concept indices]} used to derive concept sets.
        train_split, val_split: splits with images, labels, annotations.
        batch_size, seed, device: the usual.
    '''

    def __init__(self, model, loss_config, concepts, train_split, val_split=None,
                 batch_size=64, seed=0, device='cpu', num_workers=0):
        self.model = model.to(device)
        self.loss_config = loss_config
        self.concepts = concepts
        self.train_split = train_split
        self.val_split = val_split
        self.batch_size = batch_size
        self.seed = seed
        self.device = device
        self.num_workers = num_workers
        self.input_size = tuple(train_split.images.shape[-2:])
        self.history = []
        self.best_score = None
        self._epochs_run = 0

    def _loader(self):
        generator = torch.Generator()
        generator.manual_seed(self.seed * 100003 + self._epochs_run)
        return DataLoader(self.train_split.dataset(), batch_size=self.batch_size, shuffle=True,
                          generator=generator, num_workers=self.num_workers)

    def _annotations(self, labels, indices):
        anns = []
        for y, i in zip(labels.tolist(), indices.tolist()):
            source = self.train_split.annotations[i]
            anns.append(ConceptAnnotation(source.sample_id, self.concepts.get(y, []), source.boxes))
        return anns

    def _heads(self, lap):
        if lap.lap_config.heads:
            return [DiscLossConfig(h.get('min_ar'), h.get('max_ar'), h.get('iar'),
                                   self.loss_config.concordance_t)
                    for h in lap.lap_config.heads]
        return self.loss_config.heads

    def losses(self, images, labels, indices):
        ''' (total, task) losses of one batch; runs the forward pass. '''
        logits = self.model(images)
        task = F.cross_entropy(logits, labels)
        cfg = self.loss_config
        laps = self.model.laps()
        per_lap, pairs, selector = [], [], []
        if laps and cfg.use_lap_loss:
            anns = self._annotations(labels, indices)
            for lap in laps:
                heads = self._heads(lap)
                if cfg.supervision == 'full':
                    per_lap.append(bbox_supervision_loss(lap.concept_maps, anns, self.input_size, heads,
                                                         lap.selector_maps))
                else:
                    per_lap.append(concept_discrimination_loss(lap.concept_maps, lap.selector_maps, anns, heads))
                if lap.selector_maps is not None:
                    selector.append(discriminative_selector_loss(lap.selector_maps, anns, heads))
        if cfg.use_concordance:
            for a, b in zip(laps, laps[1:]):
                pairs.append(concordance_loss(a.concept_maps, b.concept_maps, cfg.concordance_t, cfg.one_sided))
        total = combine_losses(task, per_lap, pairs, cfg.weights)
        for s in selector:
            total = total + s
        return total, task

    def train_epoch(self, optimizer):
        self.model.train()
        freeze_norm_stats(self.model)
        totals, tasks = [], []
        for images, labels, indices in self._loader():
            images, labels = images.to(self.device), labels.to(self.device)
            optimizer.zero_grad()
            total, task = self.losses(images, labels, indices)
            total.backward()
            optimizer.step()
            totals.append(float(total))
            tasks.append(float(task))
            logger.debug('batch loss %.4f (task %.4f)' % (totals[-1], tasks[-1]))
        self._epochs_run += 1
        return float(np.mean(totals)) if totals else 0.0, float(np.mean(tasks)) if tasks else 0.0

    def validate(self):
        if self.val_split is None or not len(self.val_split):
            return None
        return balanced_accuracy(self.model, self.val_split, device=self.device)

    def fit(self, model, optimizer, epochs, stage='train'):
        ''' Run `epochs` epochs and keep the parameters of the epoch with the
        best validation balanced accuracy. Signature matches
        surgery.staged_training. '''
        if model is not self.model:
            raise LapConfigError('Trainer.fit called with a foreign model')
        if epochs <= 0:
            logger.warning('Stage %s has 0 epochs; keeping the current parameters' % stage)
            return self.model
        best_state, best = None, None
        for epoch in range(epochs):
            loss, task = self.train_epoch(optimizer)
            score = self.validate()
            self.history.append({'stage': stage, 'epoch': epoch + 1, 'loss': loss, 'task_loss': task,
                                 'val_balanced_accuracy': score})
            logger.info('[%s] epoch %d: loss %.4f, task %.4f, val balanced accuracy %s' % (
                stage, epoch + 1, loss, task, 'n/a' if score is None else '%.4f' % score))
            if score is not None and (best is None or score > best):
                best, best_state = score, copy.deepcopy(self.model.state_dict())
        if best_state is not None:
            self.model.load_state_dict(best_state)
            self.best_score = best
        return self.model

    def train(self, optimizer_name, lr, weight_decay, epochs):
        optimizer = make_optimizer(optimizer_name, self.model.parameters(), lr, weight_decay)
        return self.fit(self.model, optimizer, epochs)
