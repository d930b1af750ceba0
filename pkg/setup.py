from setuptools import find_packages, setup


def requirements(name):
    list_requirements = []
    with open(f"{name}.txt") as f:
        for line in f:
            list_requirements.append(line.rstrip())
    return list_requirements


setup(
    name="stemmed-network",
    packages=find_packages(exclude=("tests",)),
    version="0.1.0",
    description="Mutually-exciting network point processes with dynamic, data-driven arcs",
    python_requires=">=3.9",
    install_requires=requirements("requirements"),  # Optional
    extras_require={"test": requirements("requirements-test")},
    entry_points={"console_scripts": ["stemmed=stemmed.run_stemmed:main"]},
)
