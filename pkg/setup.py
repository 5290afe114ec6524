import setuptools
import os

THIS_DIR = os.path.abspath(os.path.dirname(__file__))

VERSION = None
with open(os.path.join(THIS_DIR, "mindcine", "__version__.py")) as f:
    tmp_dict = {}
    exec(f.read(), tmp_dict)
    VERSION = tmp_dict["__version__"]

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="mindcine",
    version=VERSION,
    author="mindcine developers",
    entry_points={"console_scripts": ["mindcine=mindcine.cli:main"]},
    description="EEG-to-video decoding library and cli, trained and verified on synthetic EEG-video data",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["test", "examples", "examples.*"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    install_requires=[
        "numpy >= 1.22",
        "scipy >= 1.8",
        "torch >= 2.0",
        "matplotlib >= 3.5",
    ],
    extras_require={
        "test": ["pytest >= 7"],
    },
    python_requires='>=3.8',
)
