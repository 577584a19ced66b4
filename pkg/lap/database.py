# Results store: one Run per evaluation, one Metric per report key

import datetime
import logging

import simplejson as json
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, TypeDecorator, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker

from . import config

logger = logging.getLogger(__name__)

Base = declarative_base()


class Database(object):

    def __init__(self, uri=None):
        ''' Connect to the results DB, creating tables as needed.
        Args:
            uri: SQLAlchemy database URI; defaults to config.SQLITE_URI.
        '''
        if uri is None:
            uri = config.SQLITE_URI
        engine = create_engine(uri, echo=False)
        Session = sessionmaker(bind=engine)
        Base.metadata.create_all(engine)
        self.session = Session()

    def add(self, record):
        self.session.add(record)

    def save(self):
        self.session.commit()

    def record_run(self, name, seed, cfg, metrics, commit=True):
        ''' Store a metrics report along with the config that produced it. '''
        run = Run(name=name, seed=seed, config=cfg)
        for key in sorted(metrics):
            value = metrics[key]
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                run.metrics.append(Metric(key=key, value=float(value)))
            else:
                logger.debug('Not storing non-numeric metric %s' % key)
        self.add(run)
        if commit:
            self.save()
        return run

    def runs(self, name=None):
        query = self.session.query(Run)
        if name is not None:
            query = query.filter_by(name=name)
        return query.order_by(Run.id).all()

    def print_stats(self):
        ''' Summarize the current state of the DB. '''
        n_runs = self.session.query(Run).count()
        n_metrics = self.session.query(Metric).count()
        print("The database currently contains:\n\t%d runs\n\t%d metrics" % (n_runs, n_metrics))


# Create a JSONString column type for convenience
class JsonString(TypeDecorator):
    impl = Text
    cache_ok = True

    def process_result_value(self, value, dialect):
        if value is None:
            return None
        else:
            return json.loads(value)

    def process_bind_param(self, value, dialect):
        if value is None:
            return None
        else:
            return json.dumps(value, sort_keys=True)


class Run(Base):

    __tablename__ = 'runs'

    id = Column(Integer, primary_key=True)
    name = Column(String(200))
    seed = Column(Integer)
    config = Column(JsonString)
    created_at = Column(DateTime, default=datetime.datetime.utcnow)
    updated_at = Column(DateTime, default=datetime.datetime.utcnow,
                        onupdate=datetime.datetime.utcnow)

    metrics = relationship('Metric', cascade="all, delete-orphan", backref='run')

    def as_dict(self):
        return dict((m.key, m.value) for m in self.metrics)


class Metric(Base):

    __tablename__ = 'metrics'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('runs.id'))
    key = Column(String(200))
    value = Column(Float)
