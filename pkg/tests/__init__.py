"""Root of testing, needed for local imports."""
