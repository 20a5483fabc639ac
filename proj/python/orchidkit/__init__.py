"""orchidkit: joint color-depth-normal latent diffusion toolkit.

Thin wrapper over the compiled core. When running from a build tree the
extension lives next to the build products rather than inside the package.
"""

try:
    from ._core import *  # noqa: F401,F403
    from ._core import __version__  # noqa: F401
except ImportError:  # in-tree builds: extension on PYTHONPATH, not in-package
    from _core import *  # noqa: F401,F403
    from _core import __version__  # noqa: F401
