"""
Pydantic schemas for experiment configs and API payloads
"""
