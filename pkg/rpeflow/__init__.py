"""
Joint optical-flow and scene-flow estimation from images, point clouds and events.
"""
__version__ = "1.0.0"
