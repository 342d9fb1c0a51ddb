from envparse import env


WORKERS = env.int('LAPA_WORKERS', default=1)
LOG_LEVEL = env.str('LAPA_LOG_LEVEL', default='INFO')
