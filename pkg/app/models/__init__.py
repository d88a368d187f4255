# pydantic models shared across services
