from importlib.metadata import PackageNotFoundError, version

# Distribution name as published (matches [project].name in pyproject.toml)
_DIST_NAME = "interaction-flows"

try:
    __version__ = version(_DIST_NAME)
except PackageNotFoundError:
    __version__ = "0.0.0+local"

__all__ = ["__version__"]
