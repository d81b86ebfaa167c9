"""``python -m splatmesh``."""
from .cli import main

if __name__ == "__main__":
    main()
