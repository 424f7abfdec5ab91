"""triplift: lift six surround-view camera images into a renderable triplane."""

__version__ = "0.1.0"
