"""
c2cl - contact-to-contactless fingerprint matching
接触式与非接触式指纹匹配
"""
__version__ = "1.0.0"
