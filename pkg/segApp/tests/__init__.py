# segApp/tests/__init__.py
