try:
    import tomllib as _toml
except ImportError:  # Python 3.10
    import tomli as _toml


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return _toml.load(fh)
