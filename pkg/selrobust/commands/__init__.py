"""selrobust CLI commands."""
