from setuptools import setup, find_packages

# Read the content of README file
with open('README.md', encoding='utf-8') as f:
    long_description = f.read()

setup(
    name="compression_lab",
    version="0.1",
    packages=find_packages(exclude=["tests"]),
    install_requires=["numpy", "scipy", "pandas", "tqdm", "matplotlib", "toml", "zarr>=2.18,<3", "numcodecs"],
    long_description=long_description,
    long_description_content_type='text/markdown',
)
