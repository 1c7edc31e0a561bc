"""Margin disparity discrepancy domain adaptation for U-Net segmentation."""
