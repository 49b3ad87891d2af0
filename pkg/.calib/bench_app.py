from boxseg.service import create_app
def make_app():
    return create_app(checkpoint_path='desk.bsc')
