def test_import_and_version():
    import canids

    assert isinstance(canids.__version__, str)
