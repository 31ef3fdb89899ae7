"""crossmark: cross-modal 3D landmark localization.

Contrastively trained twin patch encoders locate reference-volume landmarks
in a query volume via a bounded similarity search, with a volumetric SIFT
baseline and a full synthetic-data evaluation harness.
"""

__version__ = "0.1.0"
