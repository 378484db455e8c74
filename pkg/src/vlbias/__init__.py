"""Gender-bias measurement, mediation analysis and mitigation on a planted toy vision-language detector."""

__version__ = "0.1.0"
