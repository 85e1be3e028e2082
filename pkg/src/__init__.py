"""
Conditional video codec lab: multi-scale non-local context mining, conditional
entropy coding and partial cascaded fine-tuning at desk scale.
"""
