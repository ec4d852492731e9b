from nightstereo.cli import main

raise SystemExit(main())
