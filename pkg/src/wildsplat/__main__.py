from wildsplat.cli import main

main()
