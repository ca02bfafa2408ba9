from lienet.cli import main

main()
