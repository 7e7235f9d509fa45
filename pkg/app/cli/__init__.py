"""Command-line harness: experiment commands and the worker pool."""
