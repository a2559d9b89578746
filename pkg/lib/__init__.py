"""County lexical nowcasting library."""

__version__ = "0.3.0"
