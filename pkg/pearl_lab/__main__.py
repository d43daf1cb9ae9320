from pearl_lab.cli import main

raise SystemExit(main())
