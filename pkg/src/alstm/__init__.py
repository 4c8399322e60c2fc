"""Advanced-LSTM weighted-pooling networks for utterance-level emotion recognition."""

__version__ = "0.1.0"
