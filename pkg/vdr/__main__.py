from vdr.cli import app

app(prog_name="vdr")
