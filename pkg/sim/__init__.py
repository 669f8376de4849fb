# Bench Hedge - Numerical Core
# Minimal market model simulation, real-world pricing and benchmarked risk minimization
