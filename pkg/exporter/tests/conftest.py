import os
import sys

# stub models resolve through importlib by module name, so the directory
# holding stub_models.py must be importable during the tests
sys.path.insert(0, os.path.dirname(__file__))
