"""Wire protocol, request handlers and the serving runtime."""
