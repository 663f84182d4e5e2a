"""Package details."""

__version__ = "0.3.0dev"
__docs__ = "Desk-scale workbench for scaling conversion-rate ranking models and their serving stack"
__author__ = "Jiri Borovec"
__author_email__ = "j.borovec+github[at]gmail.com"
__homepage__ = "https://github.com/Borda/cvrscale"
__source_code__ = "https://github.com/Borda/cvrscale"
__license__ = "Apache-2.0"
