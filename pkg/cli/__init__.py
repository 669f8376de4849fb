# Bench Hedge - batch experiment driver
# Runs simulations, pricers, hedges and verifications from JSON configs
__version__ = "0.1.0"
