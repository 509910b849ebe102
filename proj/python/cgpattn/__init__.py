"""Correlated-GP attention: python surface over the C++ core."""

try:
    # Installed layout: the extension lives inside the package.
    from ._cgpattn import *  # noqa: F401,F403
    from ._cgpattn import __doc__  # noqa: F401
except ImportError:
    # Build-tree layout: the extension sits directly on sys.path.
    from _cgpattn import *  # noqa: F401,F403
    from _cgpattn import __doc__  # noqa: F401
