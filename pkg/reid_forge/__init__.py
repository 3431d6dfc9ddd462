"""
球員重識別度量學習工具
reid-forge: player re-identification with hierarchical batch sampling and centroid losses
"""

__version__ = "1.0.0"
