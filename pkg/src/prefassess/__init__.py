"""Personalized image preference assessment: predict a user's profile, then judge candidates."""

__version__ = "0.1.0"
