# Quantum Trajectory Spectral Toolkit application package
