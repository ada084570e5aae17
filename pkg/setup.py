"Build script for setuptools."

from __future__ import absolute_import
from setuptools import setup, find_packages
from distutils.util import convert_path

with open("README.md", "r") as fh:
    LONG_DESCRIPTION = fh.read()

with open(convert_path("taylorformer/VERSION")) as version_file:
    version_no = version_file.read().strip()

setup(
    name="taylorformer",
    version=version_no,
    license="GPL 3",
    description="multi-branch linear transformer for image dehazing",
    packages=find_packages(exclude=["tests"]),
    package_data={"taylorformer": ["VERSION"]},
    entry_points={"console_scripts": ["taylorformer = taylorformer.__main__:entry"]},
    install_requires=[
        "setuptools>=30.3.0",
        "wheel",
        "numpy>=1.20",
        "scipy>=1.6",
        "einops>=0.4",
        "scikit-image>=0.18"
    ],
    extras_require={
        "plot": ["matplotlib"],
        "test": ["pytest>=6"]
    },
    python_requires='>=3.8',
    long_description=LONG_DESCRIPTION,
    long_description_content_type="text/markdown",
    keywords=["image dehazing", "image restoration", "vision transformer",
              "linear attention", "taylor expansion", "deformable convolution"],
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Image Processing"
    ],
)
