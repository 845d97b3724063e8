# HTTP routers for online queries
