# makes this directory importable so tests can share the oracle helpers
