# Configuration file for the Sphinx documentation builder.
import os
import sys

sys.path.insert(0, os.path.abspath("../.."))
from relay import __version__  # isort:skip

project = "relay"
copyright = "2024, relay developers"
author = "relay developers"

version = __version__
release = version

extensions = ["sphinx.ext.autodoc", "sphinx.ext.napoleon"]

source_suffix = ".rst"
master_doc = "index"
exclude_patterns = []
pygments_style = "sphinx"

html_theme = "sphinx_rtd_theme"
