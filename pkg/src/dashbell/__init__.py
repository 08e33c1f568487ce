"""Software-simulated smart doorbell.

A dash-button edge controller, a coordination server with durable entry
storage, owner channels (framed TCP plus a WebSocket bridge), device
simulators, a fault monitor, and a deterministic scenario runner, all in
one process-spawning-free package.
"""

__version__ = "0.1.0"
