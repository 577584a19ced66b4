import os

from setuptools import setup

# fetch version from within the lap module
with open(os.path.join('lap', 'version.py')) as f:
    exec(f.read())

with open('requirements.txt') as f:
    requirements = [line.strip() for line in f if line.strip() and not line.startswith('#')]

setup(name="lap",
      version=__version__,
      description="Local Attention Pooling: interpretable pooling layers, knowledge-injection losses and "
                  "map evaluation for CNNs",
      packages=["lap",
                "lap.tests"],
      package_data={'lap': ['configs/*.json'],
                    'lap.tests': ['data/*']
                    },
      install_requires=requirements,
      test_suite='lap.tests',
      entry_points={'console_scripts': ['lap=lap.cli:main']},
      )
