#!/usr/bin/env python

from setuptools import setup

DESCRIPTION = (
    'Point to point one-sided writes with immediate counting over unordered rails'
    )


CLASSIFIERS = [
    'Operating System :: OS Independent',
    'Programming Language :: Python',
    'Programming Language :: Python :: 3',
    'License :: OSI Approved :: GNU Lesser General Public License v3 (LGPLv3)',
    'Development Status :: 3 - Alpha',
    'Intended Audience :: Developers',
    'Topic :: System :: Networking'
    ]

setup(
    name = 'XferEngine',
    version = '0.1-dev',
    description = DESCRIPTION,
    long_description = open('README.md').read(),
    long_description_content_type = 'text/markdown',
    license = 'LGPLv3',
    platforms = 'Platform Independent',
    packages = ['XferEngine'],
    keywords = 'rdma transfer kvcache moe',
    classifiers = CLASSIFIERS,
    python_requires = '>=3.9',
    install_requires = ['numpy', 'numba'],
    entry_points = {
        'console_scripts': [
            'xferbench = XferEngine.cli:xferbench_main',
            'moebench = XferEngine.cli:moebench_main',
            'kvdemo = XferEngine.cli:kvdemo_main',
            'wtransfer = XferEngine.cli:wtransfer_main',
        ],
    },
    )
