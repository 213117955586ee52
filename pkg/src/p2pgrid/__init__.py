"""Grid-aware peer-to-peer energy trading among microgrids."""
from .network import NetworkTopology, load_network

__version__ = "0.1.0"

__all__ = ["NetworkTopology", "load_network", "__version__"]
