# Mixed-cohort sleep stager
