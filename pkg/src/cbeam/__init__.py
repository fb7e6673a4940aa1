"""Compressed beamforming for sub-Nyquist sector ultrasound imaging."""
