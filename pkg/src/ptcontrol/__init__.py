"""Process-tensor toolkit for pulse control of driven qubits in a phonon bath.

Build the environment's process tensor once (:mod:`ptcontrol.process_tensor`),
then propagate any drive through it (:mod:`ptcontrol.dynamics`), shape pulses
with a pixelated spectral mask (:mod:`ptcontrol.pulse`) and search pulse
parameters (:mod:`ptcontrol.optimize`).
"""

__version__ = "0.1.0"
