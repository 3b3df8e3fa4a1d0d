"""Application shell: checkpoint container, run configuration, counters, CLI."""
