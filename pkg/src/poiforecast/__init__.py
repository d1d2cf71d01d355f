"""Next-POI forecasting for POIs unseen during training."""

__version__ = "0.1.0"
