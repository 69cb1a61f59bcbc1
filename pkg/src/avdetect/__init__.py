"""Audio-visual forgery detection and localization on feature sequences."""
