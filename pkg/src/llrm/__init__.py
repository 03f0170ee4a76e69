"""Clearing engine for a localized load-reduction market on a radial feeder."""
