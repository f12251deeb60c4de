"""Traffic speed forecasting with wavelet bands, a motif graph recurrent network and ARMA."""

__version__ = "0.1.0"
