"""Software twin of a wrist-worn pneumatic haptic device.

The package bundles the device's GET command protocol, a fixed-timestep
physics model of its pumps, valves, servo arms and inflatables, an HTTP
firmware emulator, the host-side closed-loop controller, a deterministic
scenario player, and a CLI harness for benchmarks and trace verification.
"""

__version__ = "0.1.0"
