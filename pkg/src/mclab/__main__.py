from mclab.cli import main

main()
