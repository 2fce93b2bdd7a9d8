"""Text-queried target sound event detection: a language-queried separator front end
feeding one CRNN detection branch per event class, plus baselines, metrics and a
synthetic data generator."""

__version__ = "0.1.0"
