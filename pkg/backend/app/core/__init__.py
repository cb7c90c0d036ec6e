"""Core configuration, seeding and observability"""
