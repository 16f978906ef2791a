from setuptools import setup, find_packages

setup(
    name="predprey_ensemble",
    version="0.1.0",
    description="Stochastic and mean-field simulation of lattice predator-prey dynamics.",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    install_requires=[
        "numpy>=1.22",
        "scipy>=1.8",
        "joblib>=1.1",
    ],
    extras_require={
        "dev": ["pytest", "flake8"],  # Development dependencies
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: Apache Software License",
        "Operating System :: OS Independent",
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "Topic :: Scientific/Engineering",
    ],
    python_requires=">=3.8",
    entry_points={
        'console_scripts': [
            'predprey-sim=predprey_ensemble.cli:main',
        ],
    },
)
