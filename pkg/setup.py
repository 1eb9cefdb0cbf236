import setuptools

with open("README.md", "r") as fh:
    long_description = fh.read()

setuptools.setup(
    name="orpf4py",
    version="0.1.0",
    author="orpf4py developers",
    description="Optimal reactive power flow studies of distribution grids with transformer taps",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=['orpf4py'],
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8.0',install_requires=[
        'numpy',
        'scipy',
        'pandas',
        'jax'
    ],
    extras_require={
        'test': ['pytest'],
    },
    package_data={
        'orpf4py': ['data/*.json', 'data/*.csv'],
    },
    entry_points={
        'console_scripts': ['orpf4py=orpf4py.cli:main'],
    },

)
