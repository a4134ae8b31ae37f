from setuptools import setup
import re
from pathlib import Path

CURRENT_DIR = Path(__file__).parent

#-- read the version without importing the package (numpy may not be installed yet)
with open(str(CURRENT_DIR / 'memnav' / '__init__.py')) as fh:
    version = re.search(r"__version__ = '([^']+)'", fh.read()).group(1)

with open("README.md", "r") as fh:
    long_description = fh.read()


setup(
    name='memnav',
    version=version,
    description='Imitation-learned memory-based navigation policies and their VC-dimension estimates',
    long_description=long_description,
    long_description_content_type="text/markdown",
    python_requires='>=3.7',
    packages=['memnav'],
    package_data={'memnav': ['schemas/*.json']},
    license='MIT',
    classifiers=[
        # https://pypi.org/pypi?%3Aaction=list_classifiers
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Operating System :: POSIX :: Linux',
        'Operating System :: MacOS :: MacOS X',
        'Operating System :: Microsoft :: Windows'
    ],
    install_requires=[
        'Click',
        'jsonschema',
        'jsonref',
        'numpy>=1.17'
    ],
    extras_require={
        'plot': ['matplotlib'],
        'test': ['pytest']
    },
    entry_points='''
        [console_scripts]
        memnav=memnav.memnav:cli
    ''',
)
