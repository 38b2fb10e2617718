"""
BDT Forecast
Multi-horizon EV charging load forecasting: Bi-LSTM embedding, denoising autoencoder and transformer encoder
"""

__version__ = "1.0.0"
