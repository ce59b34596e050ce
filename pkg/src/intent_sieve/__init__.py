"""Top-level package for intent-sieve."""
