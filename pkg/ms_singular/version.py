__version__ = '0.1.0_dev'
__release_date__ = '2099-09-11 20:00:00'
