from envparse import env


OUTPUT_ROOT = env.str('LAPA_OUTPUT_ROOT', default='runs')
DATA_SHARD_SIZE = env.int('LAPA_DATA_SHARD_SIZE', default=500)
