import sys

from itm.cli import main

# Script entry point: python app.py sweep configs/default_1d.json --eps 0.2,0.1,0.05,0.025
if __name__ == '__main__':
    sys.exit(main())
