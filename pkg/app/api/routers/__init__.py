"""API routers."""

