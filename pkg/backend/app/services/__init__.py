"""Services layer: ingestion, fault injection, encoding, models and evaluation"""
