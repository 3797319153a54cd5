from .version import __release_date__, __version__

__all__ = ['__version__', '__release_date__']
