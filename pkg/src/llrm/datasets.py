"""Bundled IEEE 33-bus feeder with the consumer split and bids used in the examples."""

from importlib import resources

from .grid import DEFAULT_BASES, load_bids, load_consumers, load_network

FILES = {
    "network": "ieee33_branches.csv",
    "loads": "ieee33_loads.csv",
    "consumers": "consumers.csv",
    "bids": "bids.csv",
}


def canonical_paths() -> dict[str, str]:
    root = resources.files("llrm") / "data"
    return {k: str(root / v) for k, v in FILES.items()}


def load_ieee33(limit="load", bases=DEFAULT_BASES):
    """Return ``(network, consumers, bids)`` for the bundled case."""
    p = canonical_paths()
    net = load_network(p["network"], p["loads"], bases)
    consumers = load_consumers(p["consumers"], net)
    return net, consumers, load_bids(p["bids"], consumers, limit=limit)
