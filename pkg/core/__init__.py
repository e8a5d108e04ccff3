"""
WiFlow pipeline modules: CSI ingest, labels, model, training and tooling.
"""
