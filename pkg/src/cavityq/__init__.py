"""cavityq: exact wavefunction simulator for heralded cavity-QED protocols.

Small atom-cavity registers, cavity-assisted Raman pulses, and two
interchangeable noise backends (analytic environment scalars vs explicit
bath-mode unitaries) feeding heralded protocols: a flag-verified joint
measurement, entanglement over a lossy photonic link, and a purified
controlled-phase gate.
"""

__version__ = "0.1.0"
