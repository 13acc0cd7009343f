"""
Pytest configuration for recollide.
Registers the shared fixtures plugin.
"""

# Import the plugin to register it
pytest_plugins = ["src.core.pytest_fixtures"]
