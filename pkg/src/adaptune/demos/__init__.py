"""Desk-scale adaptive operators: contextual convolution and a deferred-reward join."""
