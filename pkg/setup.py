#!/usr/bin/env python3

from setuptools import setup, find_packages
import os

here = os.path.abspath(os.path.dirname(__file__))

with open(os.path.join(here, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='sigeval',
    version='0.1.0',
    description='Social signal evaluation harness for prompted language models on clinical conversation transcripts',
    long_description=long_description,
    long_description_content_type='text/markdown',
    author='sigeval Development Team',
    author_email='sigeval@example.com',
    url='https://github.com/example/sigeval',
    packages=find_packages(exclude=['tests', 'tests.*']),
    python_requires='>=3.9',
    install_requires=[
        'click>=8.0.0',
        'colorama>=0.4.6',
        'numpy>=1.21.0',
        'scipy>=1.9.0',
        'pandas>=1.5.0',
        'scikit-learn>=1.0.0',
        'openai>=1.0.0',
        'tomli>=1.1.0; python_version < "3.11"',
    ],
    extras_require={
        'dev': [
            'pytest>=6.0.0',
            'pytest-mock>=3.0.0',
            'pytest-cov>=2.0.0',
            'black>=21.0.0',
            'flake8>=3.8.0',
            'mypy>=0.800',
        ],
    },
    entry_points={
        'console_scripts': [
            'sigeval=sigeval.cli:main',
        ],
    },
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
        'Programming Language :: Python :: 3.12',
        'Operating System :: OS Independent',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
    ],
    keywords='llm evaluation social signals clinical conversations mixed models fairness',
)
