from .export import ExportJob, export, read_class_file
from .models import load_model

__version__ = "0.1.0"
