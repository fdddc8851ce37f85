from pointfold.cli import main

main()
