from os.path import dirname, join, sep as pathsep


def get_test_data_path():
    """Returns the path to test datasets, terminated with separator (/ vs \\)"""
    return join(dirname(__file__), 'data') + pathsep


def small_config(**sections):
    """A desk-sized config: 16 x 16 images, tiny splits and a narrow network."""
    from lap import config
    overrides = {
        'data': {'image_size': 16, 'n_train': 32, 'n_val': 16, 'n_test': 16, 'radius_min': 2,
                 'radius_max': 4, 'distractor_size': 3, 'n_distractors': 1},
        'model': {'channels': [4, 8, 8], 'lap_blocks': [2, 3]},
        'train': {'epochs': 1, 'batch_size': 16},
    }
    for name, value in sections.items():
        if isinstance(value, dict) and name in overrides:
            overrides[name].update(value)
        else:
            overrides[name] = value
    return config.merge_config(overrides)
