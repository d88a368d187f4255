# spectral solvers, asymptotic theory, simulation and backtest services
