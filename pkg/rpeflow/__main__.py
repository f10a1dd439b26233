from rpeflow.main import run

run()
