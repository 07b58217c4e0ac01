# meter.py - command-line entry for the desk-scale vision-language transformer

import sys

from meter_desk.cli import main

if __name__ == '__main__':
    sys.exit(main())
