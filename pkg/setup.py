#!/usr/bin/env python
"""
Risk-aware FTR bidding for generation companies in a transmission rights auction.
"""

from setuptools import setup, find_packages

setup(
    name="ftrbid",
    keywords="ftr, electricity markets, power flow, nash equilibrium",
    packages=find_packages(),
    include_package_data=True,
    package_data={
        "ftrbid.config": ["*.yml", "*.json", "scenarios/*.yml"],
    },
    license='MIT',
    classifiers=[
        'Development Status :: 4 - Beta',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'Topic :: Scientific/Engineering',
    ],
    python_requires=">=3.10",
    entry_points={
        'console_scripts': [
            'ftrbid = ftrbid.cli:main',
        ],
    },
    install_requires=[
        'appdirs',
        'attrs>=20.3.0',
        'cattrs>=22.1',
        'click>=8.2',
        'jsonschema',
        'networkx',
        'numpy',
        'pandas>=1.5',
        'pyyaml',
        'ruamel.yaml',
        'scipy>=1.9',
        'tabulate[widechars]<1.0.0',
    ],
    extras_require={
        'testing': [
            'pytest>=6.0.0',
            'pytest-datadir',
            'pytest-xdist',
            'pytest-mock',
            'pytest-cov',
        ],
    }
)
